use kvtriage::eviction::{allocate_budgets, evict_layer, Allocation, Budget, EvictionConfig, Selector};
use kvtriage::synthetic::{generate_head_at, generate_layer, generate_probes, SyntheticSpec};
use kvtriage::validation::{reduction_sweep, validate_assumption, SweepHead};
use proptest::prelude::*;

fn spec(n: usize, heads: usize, window: usize, zipf: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n,
        head_dim: 4,
        model_dim: 8,
        n_heads: heads,
        window,
        zipf_exponent: zipf,
        seed,
        ..SyntheticSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eviction_keeps_window_and_exact_budgets(
        n in 16usize..80,
        heads in 1usize..5,
        window in 1usize..8,
        frac in 0.1f64..1.0,
        adaptive in any::<bool>(),
        attention_only in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let s = spec(n, heads, window, 1.2, seed);
        let layer = generate_layer(&s, 0).unwrap();
        let cfg = EvictionConfig {
            budget: Budget::Fraction(frac),
            window,
            allocation: if adaptive { Allocation::Adaptive } else { Allocation::Flat },
            selector: if attention_only { Selector::AttentionOnly } else { Selector::PerturbationConstrained },
            ..EvictionConfig::default()
        };
        let per_head = cfg.budget.resolve(n).unwrap();
        prop_assume!(per_head >= window);
        let out = evict_layer(&layer, &cfg).unwrap();
        prop_assert_eq!(out.allocation.total, per_head * heads);
        prop_assert_eq!(out.allocation.per_head.iter().sum::<usize>(), per_head * heads);
        for (snap, ev) in layer.iter().zip(&out.heads) {
            prop_assert!(ev.budget >= window);
            prop_assert_eq!(ev.mask().budget(), ev.budget);
            prop_assert!((n - window..n).all(|i| ev.mask().is_kept(i)));
            prop_assert_eq!(ev.compacted.entries(), ev.budget);
            prop_assert_eq!(ev.compacted.keys.row(0), snap.keys.row(ev.mask().kept_indices()[0]));
        }
        prop_assert_eq!(evict_layer(&layer, &cfg).unwrap(), out);
    }

    #[test]
    fn adaptive_allocation_respects_floor_and_capacity(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..5),
        floor in 0usize..3,
        extra in 0usize..12,
    ) {
        let heads = scores.len();
        let total = (heads * floor + extra).min(heads * 6);
        let a = allocate_budgets(&scores, total, Allocation::Adaptive, floor).unwrap();
        prop_assert_eq!(a.per_head.iter().sum::<usize>(), total);
        prop_assert!(a.per_head.iter().all(|&b| b >= floor && b <= 6));
        let f = allocate_budgets(&scores, total, Allocation::Flat, floor.min(total / heads)).unwrap();
        prop_assert_eq!(f.per_head.iter().sum::<usize>(), total);
        prop_assert!(f.per_head.iter().max().unwrap() - f.per_head.iter().min().unwrap() <= 1);
    }

    #[test]
    fn sweep_rows_respect_bounds_and_reproduce(seed in 0u64..500, zipf in 0.6f64..2.0) {
        let s = spec(64, 3, 4, zipf, seed);
        let heads: Vec<SweepHead> = (0..2u32)
            .flat_map(|l| (0..3u32).map(move |h| (l, h)))
            .map(|(l, h)| SweepHead::new(generate_head_at(&s, l, h).unwrap(), generate_probes(&s, l, h, 2).unwrap()).unwrap())
            .collect();
        let cfg = EvictionConfig { window: 4, ..EvictionConfig::default() };
        let budgets = [0.1, 0.3, 1.0];
        let report = reduction_sweep(&heads, &budgets, &cfg, 2).unwrap();
        prop_assert_eq!(report.rows.len(), 6 * 3 * 2);
        prop_assert!(report.bound_violations().is_empty());
        for r in &report.rows {
            prop_assert_eq!(r.improved, r.l_ours < r.l_baseline);
            if r.budget_fraction == 1.0 {
                prop_assert!(r.l_ours < 1e-6 && r.l_baseline < 1e-6);
            }
        }
        prop_assert_eq!(reduction_sweep(&heads, &budgets, &cfg, 2).unwrap(), report);
    }

    #[test]
    fn assumption_fraction_matches_definition(
        heads in prop::collection::vec(prop::collection::vec(0.001f64..1.0, 10), 1..20),
        frac in 0.05f64..1.0,
    ) {
        let heads: Vec<Vec<f64>> = heads
            .into_iter()
            .map(|h| { let s: f64 = h.iter().sum(); h.into_iter().map(|x| x / s).collect() })
            .collect();
        let r = validate_assumption(&heads, frac, 0.5).unwrap();
        let count = r.sigma.iter().filter(|&&s| s > 0.5).count();
        prop_assert_eq!(r.fraction_satisfied, count as f64 / heads.len() as f64);
        prop_assert!(r.sigma.iter().all(|&s| (0.0..=1.0 + 1e-12).contains(&s)));
    }
}
