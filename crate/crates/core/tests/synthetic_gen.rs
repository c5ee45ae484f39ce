use sample_attention::cra::minimal_mass_fraction_head;
use sample_attention::harness::synthetic::{measure_planted_mass, measurement_rows, SyntheticSpec};
use sample_attention::attention::scaled_scores;
use sample_attention::{causal_row_softmax, generate_synthetic, Error};

fn base(s: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        sink_columns: vec![],
        slash_offsets: vec![],
        noise_scale: 0.0,
        ..SyntheticSpec::sink_local(s, 32, seed)
    }
}

#[test]
fn single_sink_reaches_its_mass() {
    let spec = SyntheticSpec {
        sink_columns: vec![(0, 0.3)],
        noise_scale: 0.3,
        ..base(256, 1)
    };
    let heads = generate_synthetic(&spec).unwrap();
    let rows: Vec<usize> = (0..256).collect();
    let m = measure_planted_mass(&heads.heads()[0], &[0], &[], &rows);
    assert!((0.24..=0.36).contains(&m.sinks[0].1), "{m:?}");
}

#[test]
fn local_slash_concentrates_near_diagonal() {
    let spec = SyntheticSpec {
        slash_offsets: vec![(0, 0.5)],
        noise_scale: 0.3,
        ..base(512, 2)
    };
    let heads = generate_synthetic(&spec).unwrap();
    let head = &heads.heads()[0];
    let scores = scaled_scores(&head.q, &head.k, 32).unwrap();
    let p = causal_row_softmax(&scores).unwrap();
    // mean mass within |q − j| < 128 over all rows
    let band: f64 = (0..512)
        .map(|i| p.row(i)[i.saturating_sub(127)..=i].iter().sum::<f64>())
        .sum::<f64>()
        / 512.0;
    assert!(band >= 0.4, "{band}");
    let m = measure_planted_mass(head, &[], &[0], &measurement_rows(512));
    assert!((m.slashes[0].1 / 0.5 - 1.0).abs() <= 0.2, "{m:?}");
}

#[test]
fn pure_noise_is_nearly_uniform() {
    let spec = SyntheticSpec {
        noise_scale: 0.05,
        ..base(512, 3)
    };
    let heads = generate_synthetic(&spec).unwrap();
    let f = minimal_mass_fraction_head(&heads.heads()[0], 0.95).unwrap();
    assert!((f - 0.95).abs() < 0.05, "{f}");
}

#[test]
fn composed_family_calibrates() {
    let spec = SyntheticSpec::composed(2048, 64, 5);
    let heads = generate_synthetic(&spec).unwrap();
    let sinks: Vec<usize> = spec.sink_columns.iter().map(|x| x.0).collect();
    let offsets: Vec<usize> = spec.slash_offsets.iter().map(|x| x.0).collect();
    let m = measure_planted_mass(&heads.heads()[0], &sinks, &offsets, &measurement_rows(2048));
    for ((_, got), (_, want)) in m.sinks.iter().chain(&m.slashes).zip(spec.sink_columns.iter().chain(&spec.slash_offsets)) {
        assert!((got / want - 1.0).abs() <= 0.2, "{got} vs {want}");
    }
}

#[test]
fn same_seed_same_heads() {
    let spec = SyntheticSpec { n_heads: 2, ..SyntheticSpec::sink_local(300, 16, 9) };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.heads(), b.heads());
    assert_ne!(a.heads()[0].q, a.heads()[1].q);
    let c = generate_synthetic(&spec.with_seed(10)).unwrap();
    assert_ne!(a.heads()[0].q, c.heads()[0].q);
}

#[test]
fn generated_values_are_f32_exact() {
    let heads = generate_synthetic(&SyntheticSpec::sink_local(128, 16, 4)).unwrap();
    for h in heads.heads() {
        for m in [&h.q, &h.k, &h.v] {
            assert!(m.as_slice().iter().all(|&x| f64::from(x as f32) == x));
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let too_much = SyntheticSpec { sink_columns: vec![(0, 0.7), (1, 0.5)], ..base(64, 0) };
    assert!(matches!(generate_synthetic(&too_much), Err(Error::InvalidInput(_))));
    let outside = SyntheticSpec { sink_columns: vec![(64, 0.1)], ..base(64, 0) };
    assert!(generate_synthetic(&outside).is_err());
    let offset = SyntheticSpec { slash_offsets: vec![(80, 0.1)], ..base(64, 0) };
    assert!(generate_synthetic(&offset).is_err());
}

#[test]
fn head_dimension_too_small_for_patterns() {
    let spec = SyntheticSpec {
        d: 3,
        sink_columns: vec![(5, 0.3)],
        slash_offsets: vec![(0, 0.3)],
        ..base(256, 0)
    };
    match generate_synthetic(&spec) {
        Err(Error::InvalidInput(msg)) => assert!(msg.contains("d=3"), "{msg}"),
        other => panic!("expected an input error, got {other:?}"),
    }
}

#[test]
fn spec_json_round_trip() {
    let spec = SyntheticSpec::composed(1024, 32, 7);
    let text = serde_json::to_string(&spec).unwrap();
    assert!(text.contains("\"S\":1024"));
    let back: SyntheticSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    let minimal: SyntheticSpec = serde_json::from_str(r#"{"S": 64, "d": 8}"#).unwrap();
    assert_eq!(minimal.n_heads, 1);
}
