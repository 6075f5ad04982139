use std::collections::BTreeSet;
use std::sync::Arc;

use hybrid_bft::app::{seeded_payload, ChecksumValidity, SeededPayloads};
use hybrid_bft::checker::{self, CheckKind};
use hybrid_bft::netsim;
use hybrid_bft::scenario::{AdversaryMode, DelayDist, Gst};
use hybrid_bft::types::{verify_certificate, BlockCert, Vote};
use hybrid_bft::{
    Block, Certificate, Committee, Message, ProtocolParams, Replica, ReplicaId, SampleSet, ScenarioConfig, SchemeKind,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Nearest rank straight from the definition: the smallest value with at
/// least p% of the set at or below it.
fn rank_oracle(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    for (i, x) in v.iter().enumerate() {
        if (i + 1) as f64 * 100.0 >= p * n as f64 {
            return *x;
        }
    }
    v[n - 1]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn percentile_matches_definition(
        values in prop::collection::vec(0.01f64..1e4, 1..300),
        p in 0.01f64..=100.0,
    ) {
        let set = SampleSet::new(values.clone(), "p").unwrap();
        prop_assert_eq!(set.percentile(p).unwrap(), rank_oracle(&values, p));
    }

    #[test]
    fn percentile_is_monotone(values in prop::collection::vec(0.01f64..1e4, 1..200), a in 0.01f64..=100.0, b in 0.01f64..=100.0) {
        let set = SampleSet::new(values, "m").unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(set.percentile(lo).unwrap() <= set.percentile(hi).unwrap());
    }

    #[test]
    fn synthetic_delay_is_a_member_no_smaller_than_min(
        values in prop::collection::vec(0.01f64..1e4, 1..100),
        k in 1usize..80,
        seed in any::<u64>(),
    ) {
        let set = SampleSet::new(values.clone(), "s").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = set.synth_large_delay(k, &mut rng).unwrap();
        prop_assert!(values.contains(&d));
        prop_assert!(d >= set.percentile(0.01).unwrap());
        prop_assert!(d <= set.max());
    }

    #[test]
    fn block_cert_verifies_iff_quorum_of_distinct_signers(signers in prop::collection::vec(0u32..7, 0..7)) {
        let (c, keys) = Committee::generate(7, 3, SchemeKind::TestMac.scheme(), 3);
        let id = Block::new(seeded_payload(32, 0, 2, ReplicaId(2)), None).id();
        let votes = signers.iter().map(|&s| Vote::new(&c, &keys[s as usize], 2, id)).collect();
        let cert = Certificate::Block(BlockCert::new(2, id, votes));
        let distinct: BTreeSet<u32> = signers.iter().copied().collect();
        let expected = signers.len() == c.quorum() && distinct.len() == signers.len();
        prop_assert_eq!(verify_certificate(&cert, &c), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Empirical CDF of the max of k draws against the exact (rank/n)^k.
    #[test]
    fn synthetic_cdf_matches_exact_max_distribution(
        values in prop::collection::btree_set(1u32..1000, 1..8),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let set = SampleSet::new(values.clone(), "cdf").unwrap();
        let draws = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let synth = set.synthetic(k, draws, &mut rng).unwrap();
        let n = values.len() as f64;
        for (i, x) in values.iter().enumerate() {
            let exact = ((i + 1) as f64 / n).powi(k as i32);
            let got = synth.samples().iter().filter(|&&s| s <= *x).count() as f64;
            let sigma = (draws as f64 * exact * (1.0 - exact)).sqrt().max(1.0);
            prop_assert!((got - draws as f64 * exact).abs() <= 5.0 * sigma, "x={x} got={got} exact={exact}");
        }
    }

    /// Decisions arrive first; blocks then show up in any order. The ledger
    /// only ever grows along the chain and ends with the whole chain.
    #[test]
    fn commits_follow_chain_order_for_any_arrival_order(order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let (c, keys) = Committee::generate(3, 1, SchemeKind::TestMac.scheme(), 1);
        let c = Arc::new(c);
        let params = ProtocolParams { delta_s: 100, delta_l: 500, fast_path: true, small_threshold: 4096, last_epoch: Some(20) };
        let mut r = Replica::new(
            c.clone(),
            keys[2].clone(),
            params,
            Arc::new(ChecksumValidity),
            Box::new(SeededPayloads { size: 64, salt: 0 }),
        );
        r.bootstrap();
        let mut blocks = Vec::new();
        let mut prev = None;
        for e in 0..5u64 {
            let b = Block::new(seeded_payload(64, 0, e, ReplicaId((e % 3) as u32)), prev);
            prev = Some(b.id());
            for k in &keys {
                r.on_message(&Message::Vote(Vote::new(&c, k, e, b.id())));
            }
            prop_assert_eq!(r.decision(e), Some(b.id()));
            blocks.push(b);
        }
        prop_assert!(r.committed_chain().is_empty());
        let ids: Vec<_> = blocks.iter().map(|b| b.id()).collect();
        for &i in &order {
            r.on_stored_block(&blocks[i]);
            let chain = r.committed_chain();
            prop_assert_eq!(chain, &ids[..chain.len()]);
        }
        prop_assert_eq!(r.committed_chain(), &ids[..]);
    }
}

fn adversary() -> impl Strategy<Value = AdversaryMode> {
    prop::sample::select(AdversaryMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_scenarios_stay_safe(
        n in 3usize..8,
        adv in adversary(),
        fast in any::<bool>(),
        seed in any::<u64>(),
        gst_ms in prop::option::of(0u32..3000),
        small_hi in 2u32..100,
        large_hi in 2u32..500,
        split in 0.0f64..=1.0,
    ) {
        let f = (n - 1) / 2;
        let byzantine = if adv == AdversaryMode::None { vec![] } else { (0..f as u32).map(|i| (2 * i + 1) % n as u32).collect() };
        let mut c = ScenarioConfig {
            n,
            f,
            byzantine,
            adversary: adv,
            fast_path: fast,
            seed,
            epochs: 10,
            gst: gst_ms.map_or(Gst::At(0.0), |g| Gst::At(f64::from(g))),
            block_payload_size: 8192,
            signature_scheme: SchemeKind::TestMac,
            ..Default::default()
        };
        c.delays.small = DelayDist::Uniform { lo_ms: 1.0, hi_ms: f64::from(small_hi) };
        c.delays.large = DelayDist::Uniform { lo_ms: 1.0, hi_ms: f64::from(large_hi) };
        c.adversary_params.split = split;
        let trace = netsim::run(&c).unwrap().trace;
        let report = checker::run_checks(&trace, &[
            CheckKind::Safety,
            CheckKind::LockInvariant,
            CheckKind::Validity,
            CheckKind::EpochSync,
            CheckKind::Availability,
            CheckKind::Bounds,
        ]).unwrap();
        for v in &report.verdicts {
            prop_assert!(v.passed, "{}", v);
        }
    }
}
