use lls_core::schema::{
    enumerate_moment_indices, enumerate_patterns, multinomial_coeff, ResponsePattern, Schema,
};
use proptest::prelude::*;

fn schema_strategy() -> impl Strategy<Value = Schema> {
    prop::collection::vec(2usize..6, 2..7).prop_map(|l| Schema::new(l).unwrap())
}

fn binom(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

proptest! {
    #[test]
    fn flatten_is_a_bijection(schema in schema_strategy()) {
        let mut seen = vec![false; schema.total_cells()];
        for j in 0..schema.num_vars() {
            for l in 1..=schema.level_count(j) {
                let row = schema.flatten(j, l).unwrap();
                prop_assert!(!seen[row]);
                seen[row] = true;
                let cell = schema.unflatten(row).unwrap();
                prop_assert_eq!((cell.variable, cell.level), (j, l));
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert!(schema.unflatten(schema.total_cells()).is_err());
    }

    #[test]
    fn multinomials_sum_to_power(k in 1usize..5, order in 0usize..7) {
        let total: u64 = enumerate_moment_indices(k, order)
            .iter()
            .map(|v| multinomial_coeff(v).unwrap())
            .sum();
        prop_assert_eq!(total, (k as u64).pow(order as u32));
    }

    #[test]
    fn moment_index_count_is_stars_and_bars(k in 1usize..5, order in 0usize..7) {
        let idx = enumerate_moment_indices(k, order);
        prop_assert_eq!(idx.len(), binom(order + k - 1, k - 1));
        prop_assert!(idx.iter().all(|v| v.order() == order));
    }

    #[test]
    fn pattern_enumeration_counts(schema in schema_strategy(), max_order in 0usize..4) {
        let patterns = enumerate_patterns(&schema, max_order);
        // Count by order via the elementary symmetric polynomial of the level counts.
        let mut e = vec![0usize; schema.num_vars() + 1];
        e[0] = 1;
        for &l in schema.levels() {
            for o in (1..e.len()).rev() {
                e[o] += e[o - 1] * l;
            }
        }
        let expected: usize = e.iter().take(max_order.min(schema.num_vars()) + 1).sum();
        prop_assert_eq!(patterns.len(), expected);
        let mut sorted = patterns.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), patterns.len());
        for p in &patterns {
            prop_assert!(p.order() <= max_order);
            prop_assert!(schema.check_pattern(p).is_ok());
        }
    }

    #[test]
    fn pattern_text_roundtrip(schema in schema_strategy(), seed in any::<u64>()) {
        let entries: Vec<u32> = schema
            .levels()
            .iter()
            .enumerate()
            .map(|(j, &l)| ((seed >> (j * 3)) % (l as u64 + 1)) as u32)
            .collect();
        let p = ResponsePattern::new(&schema, entries).unwrap();
        let back = ResponsePattern::parse(&schema, &p.to_string()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn subpatterns_are_closed(schema in schema_strategy(), seed in any::<u64>()) {
        let entries: Vec<u32> = schema
            .levels()
            .iter()
            .enumerate()
            .map(|(j, &l)| ((seed >> (j * 3)) % (l as u64 + 1)) as u32)
            .collect();
        let p = ResponsePattern::new(&schema, entries).unwrap();
        let subs = p.subpatterns();
        prop_assert_eq!(subs.len(), 1usize << p.order());
        for s in &subs {
            prop_assert!(s.is_subpattern_of(&p));
        }
    }
}

#[test]
fn rejects_bad_schemas_and_patterns() {
    assert!(Schema::new(vec![3]).is_err());
    assert!(Schema::new(vec![2, 1]).is_err());
    let s = Schema::new(vec![2, 3]).unwrap();
    assert!(ResponsePattern::parse(&s, "3,0").is_err());
    assert!(ResponsePattern::parse(&s, "1").is_err());
    assert!(ResponsePattern::parse(&s, "x,1").is_err());
}
