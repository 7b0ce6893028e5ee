use lexinet_core::dynamics::{predict_trajectory, step_plant};
use lexinet_core::network::{build_partition, validate_network};
use lexinet_core::problem::{build_pc_problem, build_tsc_problem, BuildOptions};
use lexinet_core::samples::random_instance;
use lexinet_core::{ControlInput, ExogenousForecast, TrafficState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_control(net: &lexinet_core::Network, rng: &mut ChaCha8Rng, scale: f64) -> ControlInput {
    let mut c = ControlInput::default();
    for &z in net.links().keys() {
        c.f_d.insert(z, rng.gen_range(0.0..scale));
    }
    for z in net.source_links() {
        c.f_u.insert(z, rng.gen_range(0.0..scale));
    }
    c
}

fn total(state: &TrafficState) -> (f64, f64) {
    (state.n.values().sum(), state.q.values().sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_instances_are_valid(seed in any::<u64>(), junctions in 1usize..7, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, junctions, k);
        prop_assert!(validate_network(&inst.net).is_valid());
        let part = build_partition(&inst.net, &inst.assignment).unwrap();
        for (i, neighbors) in part.neighbor_map() {
            for j in neighbors {
                prop_assert!(part.neighbor_map()[&j].contains(&i));
                prop_assert!(!part.cross_links(i, j).is_empty() || !part.cross_links(j, i).is_empty());
            }
        }
        prop_assert_eq!(inst.forecast.steps.len(), k);
    }

    #[test]
    fn plant_keeps_links_within_capacity_and_balances_mass(
        seed in any::<u64>(),
        junctions in 1usize..6,
        noise in 0.0f64..0.3,
        scale in 0.0f64..40.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, junctions, 1);
        let net = &inst.net;
        let control = random_control(net, &mut rng, scale);
        let step = step_plant(net, &inst.state, &inst.forecast.steps[0], &control, noise, &mut rng);
        for (&z, link) in net.links() {
            prop_assert!(step.next.n(z) >= -1e-9, "link {z} negative");
            prop_assert!(step.next.n(z) <= link.capacity + 1e-9, "link {z} over capacity");
            prop_assert!(step.applied.f_d(z) <= control.f_d(z) + 1e-12);
        }
        let r = &step.realized;
        let (n0, q0) = total(&inst.state);
        let (n1, q1) = total(&step.next);
        let d: f64 = r.d.values().sum();
        let f_u: f64 = step.applied.f_u.values().sum();
        prop_assert!((q1 - q0 - (d - f_u)).abs() < 1e-9);
        prop_assert!(step.next.q.values().all(|&q| q >= -1e-9));
        let e: f64 = r.e_in.values().sum::<f64>() - r.e_out.values().sum::<f64>();
        let served: f64 = net.destination_links().map(|z| step.applied.f_d(z)).sum();
        prop_assert!((n1 - n0 - (f_u + e - served)).abs() < 1e-9);
    }

    #[test]
    fn plant_without_noise_or_clamping_matches_prediction(seed in any::<u64>(), junctions in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, junctions, 1);
        // Zero outflow and zero admission never need clamping.
        let control = ControlInput::default();
        let step = step_plant(&inst.net, &inst.state, &inst.forecast.steps[0], &control, 0.0, &mut rng);
        prop_assume!(!step.clamped);
        let predicted = predict_trajectory(
            &inst.net,
            &inst.state,
            &ExogenousForecast { steps: vec![step.realized.clone()] },
            std::slice::from_ref(&step.applied),
        )
        .unwrap();
        for &z in inst.net.links().keys() {
            prop_assert!((predicted[0].n(z) - step.next.n(z)).abs() < 1e-9);
        }
    }

    #[test]
    fn coupling_blocks_align_between_neighbors(seed in any::<u64>(), junctions in 2usize..6, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, junctions, k);
        let part = build_partition(&inst.net, &inst.assignment).unwrap();
        let opts = BuildOptions::default();
        let pc = build_pc_problem(&inst.net, &part, &inst.state, &inst.forecast, opts).unwrap();
        let tsc = build_tsc_problem(&inst.net, &part, &inst.state, &inst.forecast, 0.25, 0.01, opts).unwrap();
        for problems in [&pc, &tsc] {
            for p in problems.iter() {
                let i = p.agent();
                for (&j, a) in &p.qp.couplings {
                    let q = problems.iter().find(|q| q.agent() == j).unwrap();
                    let b = &q.qp.couplings[&i];
                    prop_assert_eq!(a.nrows(), b.nrows());
                    prop_assert_eq!(&p.coupling_tags[&j], &q.coupling_tags[&i]);
                    prop_assert_eq!(a.ncols(), p.qp.dim());
                }
            }
        }
    }
}
