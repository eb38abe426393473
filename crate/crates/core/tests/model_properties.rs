use proptest::prelude::*;

use ppgconv::attention::{lsa_init_state, lsa_process_memory, lsa_windowed_step, LsaWeights};
use ppgconv::convmodel::{ConversionModel, Preset, SystemConfig, SystemKind};
use ppgconv::numcore::{Graph, Tensor};

fn filled(shape: Vec<usize>, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| (((i * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0)
        .collect();
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windowed_weights_form_a_distribution(
        enc_len in 1usize..50,
        window in 1usize..25,
        step in 0usize..80,
        ratio in 0.1f64..3.0,
        seed in 0u64..1000,
    ) {
        let mut g = Graph::new();
        let w = LsaWeights {
            query: g.constant(filled(vec![3, 4], seed)),
            memory: g.constant(filled(vec![2, 4], seed + 1)),
            loc_conv: g.constant(filled(vec![3, 2, 2], seed + 2)),
            loc_dense: g.constant(filled(vec![2, 4], seed + 3)),
            bias: g.constant(filled(vec![4], seed + 4)),
            v: g.constant(filled(vec![4, 1], seed + 5)),
        };
        let memory = g.constant(filled(vec![enc_len, 2], seed + 6));
        let processed = lsa_process_memory(&mut g, memory, &w).unwrap();
        let mut state = lsa_init_state(&mut g, enc_len).unwrap();
        // Two consecutive steps so the location features see a real alignment.
        for k in 0..2 {
            let s = g.constant(filled(vec![1, 3], seed + 7 + k as u64));
            let (alpha, next) = lsa_windowed_step(&mut g, s, &state, processed, step + k, ratio, window, &w).unwrap();
            let a = g.value(alpha).data();
            prop_assert!(a.iter().all(|x| *x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().filter(|x| **x > 0.0).count() <= window.min(enc_len));
            state = next;
        }
    }
}

#[test]
fn phone_reference_depends_on_order() {
    let model = ConversionModel::new(SystemConfig::preset(Preset::Micro, SystemKind::S3), 4).unwrap();
    let embed = |p: &[usize]| {
        let mut g = Graph::new();
        let v = model.phone_ref_encode(&mut g, p).unwrap();
        g.value(v).clone()
    };
    let forward = embed(&[1, 5, 9, 2]);
    let reversed = embed(&[2, 9, 5, 1]);
    assert!(forward.max_abs_diff(&reversed) > 1e-6);
    assert_eq!(forward.max_abs_diff(&embed(&[1, 5, 9, 2])), 0.0);
}

#[test]
fn reference_switches_only_add_parameter_groups() {
    let groups = |k: SystemKind| {
        let m = ConversionModel::new(SystemConfig::preset(Preset::Micro, k), 1).unwrap();
        m.params()
            .iter()
            .map(|(_, n, _)| n.split('.').next().unwrap().to_string())
            .collect::<std::collections::BTreeSet<_>>()
    };
    let (s1, s2, s3) = (groups(SystemKind::S1), groups(SystemKind::S2), groups(SystemKind::S3));
    assert!(s1.is_subset(&s2) && s2.is_subset(&s3));
    assert_eq!(s2.difference(&s1).cloned().collect::<Vec<_>>(), ["mel_ref"]);
    assert_eq!(s3.difference(&s2).cloned().collect::<Vec<_>>(), ["phone_ref"]);
}
