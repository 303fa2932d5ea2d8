use mergelens::checkpoint::{validate_compatibility, Checkpoint, Tensor};
use mergelens::merge::{
    merge_dare_ties, merge_linear, merge_slerp, merge_task_arithmetic, merge_ties, MergeMethod,
    MergeRecipe,
};
use mergelens::Exec;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x6d65_7267),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn shapes() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..4)
}

fn build(shapes: &[Vec<usize>], values: &[Vec<f32>]) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (i, (s, v)) in shapes.iter().zip(values).enumerate() {
        c.insert(format!("t{i}"), Tensor::new(s.clone(), v.clone()).unwrap())
            .unwrap();
    }
    c
}

/// `k` checkpoints sharing one random layout.
fn family(k: usize) -> impl Strategy<Value = Vec<Checkpoint>> {
    shapes().prop_flat_map(move |shapes| {
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        let one = sizes
            .iter()
            .map(|&n| prop::collection::vec(-4.0f32..4.0, n))
            .collect::<Vec<_>>();
        prop::collection::vec(one, k)
            .prop_map(move |vals| vals.iter().map(|v| build(&shapes, v)).collect())
    })
}

fn layout(c: &Checkpoint) -> Vec<(String, Vec<usize>)> {
    c.iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

fn ulp_diff(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let bits = x.to_bits() as i32;
        if bits < 0 {
            i32::MIN.wrapping_sub(bits) as i64
        } else {
            bits as i64
        }
    };
    (key(a) - key(b)).unsigned_abs() as u32
}

/// Tensor names, shapes and bits; metadata records the method and is ignored.
fn same_tensors(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
}

fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

fn refs(cs: &[Checkpoint]) -> Vec<&Checkpoint> {
    cs.iter().collect()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn every_method_preserves_names_and_shapes(cs in family(4), seed in any::<u64>()) {
        let (base, parents) = (&cs[0], refs(&cs[1..]));
        let want = layout(base);
        let outputs = [
            merge_linear(&parents, &[1.0, 2.0, 3.0], Exec::Sequential).unwrap(),
            merge_slerp(parents[0], parents[1], 0.3, Exec::Sequential).unwrap(),
            merge_task_arithmetic(base, &parents, 0.7, Exec::Sequential).unwrap(),
            merge_ties(base, &parents, 0.4, 1.0, Exec::Sequential).unwrap(),
            merge_dare_ties(base, &parents, 0.5, 0.4, 1.0, seed, Exec::Sequential).unwrap(),
        ];
        for out in &outputs {
            prop_assert_eq!(layout(out), want.clone());
            prop_assert!(out.non_finite_tensors().is_empty());
        }
    }

    #[test]
    fn linear_is_convex(cs in family(3), w in prop::collection::vec(0.0f64..1.0, 3)) {
        prop_assume!(w.iter().sum::<f64>() > 1e-3);
        let out = merge_linear(&refs(&cs), &w, Exec::Sequential).unwrap();
        for (name, t) in out.iter() {
            for (j, &v) in t.data().iter().enumerate() {
                let vals: Vec<f32> = cs.iter().map(|c| c.get(name).unwrap().data()[j]).collect();
                let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(lo <= v && v <= hi, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn linear_ignores_parent_order(cs in family(3), w in prop::collection::vec(0.01f64..1.0, 3)) {
        let a = merge_linear(&refs(&cs), &w, Exec::Sequential).unwrap();
        let perm = [2usize, 0, 1];
        let pc: Vec<&Checkpoint> = perm.iter().map(|&i| &cs[i]).collect();
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let b = merge_linear(&pc, &pw, Exec::Sequential).unwrap();
        prop_assert!(same_tensors(&a, &b));
    }

    #[test]
    fn slerp_is_symmetric(cs in family(2), t in 0.0f64..=1.0) {
        let ab = merge_slerp(&cs[0], &cs[1], t, Exec::Sequential).unwrap();
        let ba = merge_slerp(&cs[1], &cs[0], 1.0 - t, Exec::Sequential).unwrap();
        for ((_, x), (_, y)) in ab.iter().zip(ba.iter()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                prop_assert!((p - q).abs() <= 1e-6, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn slerp_keeps_equal_norms(cs in family(2), t in 0.0f64..=1.0) {
        // rescale b so every tensor matches a's norm
        let mut b = Checkpoint::new();
        for (name, ta) in cs[0].iter() {
            let tb = cs[1].get(name).unwrap();
            let (na, nb) = (norm(ta.data()), norm(tb.data()));
            prop_assume!(na > 1e-3 && nb > 1e-3);
            let data = tb.data().iter().map(|&x| (f64::from(x) * na / nb) as f32).collect();
            b.insert(name.clone(), Tensor::new(tb.shape().to_vec(), data).unwrap()).unwrap();
        }
        let out = merge_slerp(&cs[0], &b, t, Exec::Sequential).unwrap();
        for (name, t_out) in out.iter() {
            let target = norm(cs[0].get(name).unwrap().data());
            let got = norm(t_out.data());
            let antipodal = {
                let (x, y) = (cs[0].get(name).unwrap().data(), b.get(name).unwrap().data());
                let dot: f64 = x.iter().zip(y).map(|(p, q)| f64::from(*p) * f64::from(*q)).sum();
                dot / (target * norm(y)) < -1.0 + 1e-6
            };
            // the lerp fallback for nearly opposite vectors shrinks the norm
            if !antipodal {
                prop_assert!((got - target).abs() <= 1e-5 * target, "{got} vs {target}");
            }
        }
    }

    #[test]
    fn task_arithmetic_single_model_is_identity(cs in family(2)) {
        let out = merge_task_arithmetic(&cs[0], &[&cs[1]], 1.0, Exec::Sequential).unwrap();
        for ((_, x), (_, y)) in out.iter().zip(cs[1].iter()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                prop_assert!(ulp_diff(*p, *q) <= 1, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn ties_full_density_single_model_is_task_arithmetic(cs in family(2), lambda in 0.1f64..2.0) {
        let ties = merge_ties(&cs[0], &[&cs[1]], 1.0, lambda, Exec::Sequential).unwrap();
        let ta = merge_task_arithmetic(&cs[0], &[&cs[1]], lambda, Exec::Sequential).unwrap();
        prop_assert!(same_tensors(&ties, &ta));
    }

    #[test]
    fn dare_without_drops_is_ties(cs in family(4), k in 0.05f64..=1.0, seed in any::<u64>()) {
        let parents = refs(&cs[1..]);
        let dare = merge_dare_ties(&cs[0], &parents, 0.0, k, 1.0, seed, Exec::Sequential).unwrap();
        let ties = merge_ties(&cs[0], &parents, k, 1.0, Exec::Sequential).unwrap();
        prop_assert!(same_tensors(&dare, &ties));
    }

    #[test]
    fn merges_are_deterministic_and_mode_independent(cs in family(4), seed in any::<u64>()) {
        let (base, parents) = (&cs[0], refs(&cs[1..]));
        for exec in [Exec::Sequential, Exec::Parallel] {
            let runs = [
                merge_dare_ties(base, &parents, 0.3, 0.6, 1.0, seed, exec).unwrap(),
                merge_ties(base, &parents, 0.6, 1.0, exec).unwrap(),
                merge_slerp(parents[0], parents[1], 0.25, exec).unwrap(),
                merge_linear(&parents, &[1.0, 1.0, 1.0], exec).unwrap(),
            ];
            let again = [
                merge_dare_ties(base, &parents, 0.3, 0.6, 1.0, seed, Exec::Sequential).unwrap(),
                merge_ties(base, &parents, 0.6, 1.0, Exec::Sequential).unwrap(),
                merge_slerp(parents[0], parents[1], 0.25, Exec::Sequential).unwrap(),
                merge_linear(&parents, &[1.0, 1.0, 1.0], Exec::Sequential).unwrap(),
            ];
            for (a, b) in runs.iter().zip(&again) {
                prop_assert!(a.bitwise_eq(b));
                prop_assert_eq!(&a.metadata, &b.metadata);
            }
        }
    }

    #[test]
    fn compatibility_is_symmetric_and_reflexive(a in family(1), b in family(1)) {
        let (a, b) = (&a[0], &b[0]);
        prop_assert!(validate_compatibility(&[a, a]).compatible);
        let ab = validate_compatibility(&[a, b]);
        let ba = validate_compatibility(&[b, a]);
        prop_assert_eq!(ab.compatible, ba.compatible);
        prop_assert_eq!(ab.mismatched_names(), ba.mismatched_names());
    }
}

#[test]
fn recipe_plan_matches_direct_call() {
    let cs: Vec<Checkpoint> = (0..3)
        .map(|i| {
            Checkpoint::new().with(
                "w",
                Tensor::new(
                    vec![4],
                    vec![i as f32, -1.0 + i as f32, 0.5, 2.0 * i as f32],
                )
                .unwrap(),
            )
        })
        .collect();
    let recipe = MergeRecipe::from_json(
        r#"{"method": "dare_ties", "parents": ["a", "b"], "base": "base", "drop_prob": 0.25, "seed": 9}"#,
    )
    .unwrap();
    assert_eq!(recipe.method, MergeMethod::DareTies);
    let plan = recipe.validate().unwrap();
    let via_plan = plan
        .execute(&[&cs[1], &cs[2]], Some(&cs[0]), Exec::Sequential)
        .unwrap();
    let direct = merge_dare_ties(
        &cs[0],
        &[&cs[1], &cs[2]],
        0.25,
        0.5,
        1.0,
        9,
        Exec::Sequential,
    )
    .unwrap();
    assert!(via_plan.bitwise_eq(&direct));
}
