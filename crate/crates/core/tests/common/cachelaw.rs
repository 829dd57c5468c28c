//! Cache law shared by the trainer tests and the acceptance run.

use std::collections::VecDeque;

use proptest::prelude::*;
use sanerf_core::trainer::FeatureCache;

#[derive(Clone, Debug)]
pub enum Op {
    Insert,
    Draw,
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![Just(Op::Insert), Just(Op::Draw)]
}

/// Random cache parameters and an op sequence.
pub fn scenario() -> impl Strategy<Value = (usize, f64, usize, u64, Vec<Op>)> {
    (
        1usize..8,
        0.0f64..=1.0,
        0usize..6,
        any::<u64>(),
        prop::collection::vec(op(), 0..80),
    )
}

/// Replays `ops` against the cache and a plain queue, which must agree on
/// contents and evictions after every op.
pub fn matches_queue(capacity: usize, hit: f64, warmup: usize, seed: u64, ops: Vec<Op>) -> Result<(), TestCaseError> {
    let mut cache = FeatureCache::<u32>::new(capacity, hit, warmup, seed).unwrap();
    let mut oracle: VecDeque<u32> = VecDeque::new();
    let mut next = 0u32;
    let mut draws = 0usize;
    for op in ops {
        match op {
            Op::Insert => {
                let evicted = cache.insert(next);
                oracle.push_back(next);
                let expected = (oracle.len() > capacity).then(|| oracle.pop_front().unwrap());
                prop_assert_eq!(evicted, expected);
                next += 1;
            }
            Op::Draw => {
                let id = next;
                let (got, fresh) = cache.get_or_sample(|| Ok(id)).unwrap();
                let got = *got;
                if fresh {
                    prop_assert_eq!(got, id);
                    oracle.push_back(id);
                    if oracle.len() > capacity {
                        oracle.pop_front();
                    }
                    next += 1;
                } else {
                    prop_assert!(draws >= warmup);
                    prop_assert!(oracle.contains(&got));
                }
                draws += 1;
            }
        }
        prop_assert!(cache.len() <= capacity);
        prop_assert_eq!(
            cache.entries().copied().collect::<Vec<_>>(),
            oracle.iter().copied().collect::<Vec<_>>()
        );
    }
    Ok(())
}

pub fn fresh_fraction_follows_the_hit_probability() {
    const N: usize = 10_000;
    const WARMUP: usize = 64;
    let p_fresh = 0.25;
    let sigma = (p_fresh * (1.0 - p_fresh) / N as f64).sqrt();
    for seed in 0..5 {
        let mut cache = FeatureCache::<usize>::new(256, 0.75, WARMUP, seed).unwrap();
        for i in 0..WARMUP {
            cache.get_or_sample(|| Ok(i)).unwrap();
        }
        let fresh = (0..N).filter(|&i| cache.get_or_sample(|| Ok(i)).unwrap().1).count();
        let frac = fresh as f64 / N as f64;
        assert!(
            (frac - p_fresh).abs() <= 3.0 * sigma,
            "seed {seed}: fresh fraction {frac}"
        );
        assert!((0.22..=0.28).contains(&frac));
    }
}
