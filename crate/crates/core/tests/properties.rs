use dingdate_core::data::{allocate, dataset_stats, split_dataset, split_summary, synth_generate, Attribute, Rounding, SynthConfig};
use dingdate_core::graph::{random_graph, NodeKind, Scope};
use dingdate_core::inference::{factorized_inference, oracle_inference, NodeActivations};
use dingdate_core::losses::{focal_loss, ml_focal_loss};
use dingdate_core::{enumerate_legal, is_legal, Assignment};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hierarchy() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..=3, 0usize..=4, 1usize..=3, 1usize..=3).prop_map(|(seed, nd, extra, ns, nc)| (seed, nd, nd + extra, ns, nc))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn era_legal_count((seed, nd, np, ns, nc) in hierarchy()) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), nd, np, ns, nc);
        prop_assert_eq!(enumerate_legal(&g.view(Scope::Era)).unwrap().len(), 1 + nd + np);
    }

    #[test]
    fn enumeration_agrees_with_legality_check((seed, nd, np, ns, nc) in hierarchy()) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), nd, np, ns, nc);
        let view = g.view(Scope::EraShape);
        let legal = enumerate_legal(&view).unwrap();
        let n = view.len();
        let mut count = 0;
        for code in 0u32..(1 << n) {
            let a = Assignment::new((0..n).map(|i| code >> (n - 1 - i) & 1 == 1).collect());
            if is_legal(&view, &a).unwrap() {
                count += 1;
                prop_assert!(legal.binary_search(&a).is_ok());
            }
        }
        prop_assert_eq!(count, legal.len());
    }

    #[test]
    fn extra_exclusion_never_adds_legal_assignments(
        (seed, nd, np, ns, nc) in hierarchy(),
        pick in any::<(usize, usize)>(),
    ) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), nd, np, ns, nc);
        // any pair except two characteristics
        let a = pick.0 % g.len();
        let b = pick.1 % (g.n_era() + g.n_shapes());
        let tighter = g.with_exclusion(a, b).unwrap();
        for scope in [Scope::Era, Scope::EraShape, Scope::EraCharacteristic] {
            let before = enumerate_legal(&g.view(scope)).unwrap().len();
            let after = enumerate_legal(&tighter.view(scope)).unwrap().len();
            prop_assert!(after <= before);
        }
    }

    #[test]
    fn marginals_respect_the_hierarchy(
        (seed, nd, np, ns, nc) in hierarchy(),
        probs in prop::collection::vec(0.001f64..0.999, 40),
    ) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), nd, np, ns, nc);
        let acts = NodeActivations::new(probs[..g.len()].to_vec()).unwrap();
        for scope in [Scope::Era, Scope::EraShape, Scope::EraCharacteristic] {
            let view = g.view(scope);
            let fast = factorized_inference(&view, &acts).unwrap();
            let slow = oracle_inference(&view, &acts).unwrap();
            prop_assert!((fast.log_z - slow.log_z).abs() < 1e-9);
            let m = |node: usize| fast.marginals[view.position(node).unwrap()];
            for (a, b) in fast.marginals.iter().zip(&slow.marginals) {
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!((0.0..=1.0 + 1e-12).contains(a));
            }
            // mutually exclusive kinds carry at most unit mass
            let dyn_mass: f64 = (0..nd).map(|d| m(g.dynasty(d))).sum();
            let period_mass: f64 = (0..np).map(|p| m(g.period(p))).sum();
            prop_assert!(dyn_mass <= 1.0 + 1e-12 && period_mass <= 1.0 + 1e-12);
            for p in 0..np {
                prop_assert!(m(g.period(p)) <= m(g.dynasty(g.period_parent(p))) + 1e-12);
            }
            if scope == Scope::EraShape {
                let shape_mass: f64 = (0..ns).map(|s| m(g.shape(s))).sum();
                prop_assert!(shape_mass <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn raising_an_activation_raises_its_marginal(
        (seed, nd, np, ns, nc) in hierarchy(),
        probs in prop::collection::vec(0.01f64..0.9, 40),
        which in any::<usize>(),
    ) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), nd, np, ns, nc);
        let view = g.view(Scope::EraShape);
        let node = view.nodes()[which % view.len()];
        let base = NodeActivations::new(probs[..g.len()].to_vec()).unwrap();
        let mut raised = probs[..g.len()].to_vec();
        raised[node] += 0.05;
        let raised = NodeActivations::new(raised).unwrap();
        let pos = view.position(node).unwrap();
        let before = factorized_inference(&view, &base).unwrap().marginals[pos];
        let after = factorized_inference(&view, &raised).unwrap().marginals[pos];
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn focal_losses_are_non_negative(
        probs in prop::collection::vec(0.0f64..1.0, 12),
        gamma in 0.0f64..4.0,
        alpha in 0.01f64..0.99,
    ) {
        let mut rows = probs.clone();
        for row in rows.chunks_mut(4) {
            let s: f64 = row.iter().sum::<f64>() + 1e-9;
            row.iter_mut().for_each(|v| *v /= s);
        }
        let f = focal_loss(&rows, 4, &[0, 1, 3], gamma, alpha).unwrap();
        prop_assert!(f.value >= 0.0);
        let targets = vec![vec![true, false, false, true]; 3];
        let ml = ml_focal_loss(&probs, 4, &targets, gamma, alpha).unwrap();
        prop_assert!(ml.value >= 0.0);
    }

    #[test]
    fn largest_remainder_stays_within_one_record(n in 0usize..5000, r in prop::array::uniform3(0.1f64..10.0)) {
        let counts = allocate(n, &r, Rounding::LargestRemainder);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        let total: f64 = r.iter().sum();
        for (c, ri) in counts.iter().zip(r) {
            prop_assert!((*c as f64 - n as f64 * ri / total).abs() < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stratified_split_and_gain_bounds(seed in any::<u64>(), samples in 50usize..400) {
        let ds = synth_generate(&SynthConfig { samples, feature_dim: 4, seed, ..Default::default() }).unwrap();
        let split = split_dataset(&ds, [4.0, 1.0, 5.0], seed, Rounding::LargestRemainder).unwrap();
        let s = split_summary(&split, [4.0, 1.0, 5.0]);
        prop_assert!(s.max_period_deviation < 1.0);
        prop_assert_eq!(s.totals.iter().sum::<usize>(), ds.len());
        for attribute in [Attribute::Shape, Attribute::Characteristic] {
            let st = dataset_stats(&ds, attribute).unwrap();
            prop_assert!(st.gain >= -1e-12 && st.gain <= st.entropy + 1e-12);
            prop_assert!(st.entropy <= (ds.graph().n_periods() as f64).log2() + 1e-12);
        }
    }
}

#[test]
fn schema_round_trip_preserves_graph() {
    let g = random_graph(&mut ChaCha8Rng::seed_from_u64(3), 3, 7, 5, 6);
    let rebuilt = g.to_schema().build().unwrap();
    assert_eq!(g, rebuilt);
    assert_eq!(g.nodes().iter().filter(|n| n.kind == NodeKind::Period).count(), 7);
}
