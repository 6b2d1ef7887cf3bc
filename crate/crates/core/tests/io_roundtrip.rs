use klora_core::export::{boundary_steps, merged_tensors};
use klora_core::safetensors::Container;
use klora_core::synth::{fixture_corpus, random_pair};
use klora_core::{
    build_schedule, export_merged_lora, parse_file, read_manifest, serialize_file, write_manifest,
    Error, FusionManifest, LoraModel, NamingConvention, ScheduleParams, Selection,
};
use proptest::prelude::*;

/// Names, shapes, dtypes and payload bytes of every tensor, in header order.
fn tensor_table(bytes: &[u8]) -> Vec<(String, Vec<usize>, String, Vec<u8>)> {
    let c = Container::parse(bytes).unwrap();
    c.records
        .iter()
        .map(|r| {
            (
                r.name.clone(),
                r.shape.clone(),
                r.dtype.to_string(),
                c.payload(r).to_vec(),
            )
        })
        .collect()
}

fn assert_same_model(a: &LoraModel, b: &LoraModel) {
    assert_eq!(a.naming_convention, b.naming_convention);
    assert_eq!(a.metadata, b.metadata);
    assert_eq!(a.layers.len(), b.layers.len());
    for ((ka, la), (kb, lb)) in a.layers.iter().zip(&b.layers) {
        assert_eq!(ka, kb);
        assert_eq!(la, lb);
        let bits =
            |m: &klora_core::DenseMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&la.down), bits(&lb.down));
        assert_eq!(bits(&la.up), bits(&lb.up));
    }
}

#[test]
fn corpus_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture_corpus(20);
    for fx in &corpus {
        let src = dir.path().join(format!("{}.safetensors", fx.name));
        std::fs::write(&src, &fx.bytes).unwrap();
        let first = parse_file(&src).unwrap();
        let out = dir.path().join(format!("{}_rt.safetensors", fx.name));
        serialize_file(&first, &out).unwrap();
        let second = parse_file(&out).unwrap();
        assert_same_model(&first, &second);

        // every LoRA tensor of the original survives byte for byte
        let original: Vec<_> = tensor_table(&fx.bytes)
            .into_iter()
            .filter(|t| !t.0.starts_with("text_model"))
            .collect();
        assert_eq!(
            tensor_table(&std::fs::read(&out).unwrap()),
            original,
            "{}",
            fx.name
        );
    }
}

#[test]
fn conventions_share_key_sets() {
    let corpus = fixture_corpus(20);
    let parsed: Vec<LoraModel> = corpus
        .iter()
        .map(|f| LoraModel::from_bytes(&f.bytes, &f.name).unwrap())
        .collect();
    assert!(parsed
        .iter()
        .any(|m| m.naming_convention == NamingConvention::AB));
    // re-express an UpDown model in AB naming and compare keys
    let mut ab = parsed[0].clone();
    ab.naming_convention = NamingConvention::AB;
    let reparsed = LoraModel::from_bytes(&ab.to_bytes().unwrap(), "ab").unwrap();
    assert_eq!(
        reparsed.layers.keys().collect::<Vec<_>>(),
        parsed[0].layers.keys().collect::<Vec<_>>()
    );
    assert_eq!(reparsed.naming_convention, NamingConvention::AB);
}

#[test]
fn pairing_is_total() {
    for fx in fixture_corpus(20) {
        let c = Container::parse(&fx.bytes).unwrap();
        let m = LoraModel::from_bytes(&fx.bytes, "x").unwrap();
        let factor_tensors = c
            .records
            .iter()
            .filter(|r| r.name.ends_with(".weight"))
            .count();
        assert_eq!(m.len() * 2, factor_tensors);
        let alphas = c
            .records
            .iter()
            .filter(|r| r.name.ends_with(".alpha"))
            .count();
        assert_eq!(
            m.layers.values().filter(|l| l.alpha.is_some()).count(),
            alphas
        );
    }
}

proptest! {
    #[test]
    fn random_models_round_trip(seed in any::<u64>(), layers in 1usize..6) {
        let (content, _) = random_pair(seed, layers, (1, 6), (6, 20)).unwrap();
        let back = LoraModel::from_bytes(&content.to_bytes().unwrap(), "x").unwrap();
        prop_assert_eq!(back.layers, content.layers);
    }
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(
        parse_file("/nonexistent/x.safetensors"),
        Err(Error::Io { .. })
    ));
}

fn pair_with_switches() -> (LoraModel, LoraModel, klora_core::SelectionSchedule) {
    for seed in 0.. {
        let (c, s) = random_pair(seed, 12, (2, 8), (8, 32)).unwrap();
        let sched = build_schedule(&c, &s, &ScheduleParams::default()).unwrap();
        let switching = sched
            .grid
            .iter()
            .filter(|r| r[0] == Selection::Content && r[49] == Selection::Style)
            .count();
        if switching >= 2 && sched.grid.iter().any(|r| r[0] == r[49]) {
            return (c, s, sched);
        }
    }
    unreachable!()
}

#[test]
fn exports_copy_factors_verbatim() {
    let (content, style, sched) = pair_with_switches();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("step0.safetensors");
    let last = dir.path().join("step49.safetensors");
    export_merged_lora(&content, &style, &sched, 0, &first).unwrap();
    export_merged_lora(&content, &style, &sched, 49, &last).unwrap();
    let (a, b) = (parse_file(&first).unwrap(), parse_file(&last).unwrap());

    for (i, name) in sched.layer_order.iter().enumerate() {
        let pick = |step: usize| match sched.grid[i][step] {
            Selection::Content => content.get(name).unwrap(),
            _ => style.get(name).unwrap(),
        };
        assert_eq!(a.get(name).unwrap(), pick(0));
        assert_eq!(b.get(name).unwrap(), pick(49));
        let differs = a.get(name) != b.get(name);
        assert_eq!(differs, sched.grid[i][0] != sched.grid[i][49], "{name}");
    }
    assert!(matches!(
        export_merged_lora(&content, &style, &sched, 50, dir.path().join("x")),
        Err(Error::Argument(_))
    ));
}

#[test]
fn all_content_step_reproduces_content_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let fx = &fixture_corpus(3)[2];
    let src = dir.path().join("c.safetensors");
    std::fs::write(&src, &fx.bytes).unwrap();
    let content = parse_file(&src).unwrap();
    let style = content.scaled(0.5);
    let sched = build_schedule(&content, &style, &ScheduleParams::default()).unwrap();
    // style is half as large, so γ = 2 and S_s·γ = S_c: content wins while the scale is ≤ 1
    assert_eq!(sched.grid[0][0], Selection::Content);
    let out = dir.path().join("m.safetensors");
    export_merged_lora(&content, &style, &sched, 0, &out).unwrap();
    assert_eq!(
        tensor_table(&std::fs::read(&out).unwrap()),
        tensor_table(&fx.bytes)
    );
}

#[test]
fn solo_layers_appear_in_every_export() {
    let (content, style) = random_pair(4, 4, (2, 4), (8, 16)).unwrap();
    let mut style = style;
    let extra = style.layers.shift_remove_index(3).unwrap().1;
    let renamed = klora_core::LoraLayer {
        base_module: "style.only".into(),
        ..extra
    };
    style.layers.insert("style.only".into(), renamed);
    let sched = build_schedule(&content, &style, &ScheduleParams::default()).unwrap();
    for t in 0..50 {
        let names: Vec<String> = merged_tensors(&content, &style, &sched, t)
            .unwrap()
            .into_iter()
            .map(|p| p.name)
            .collect();
        assert!(names.iter().any(|n| n.starts_with("style.only.")));
        assert!(names
            .iter()
            .any(|n| n.starts_with(&klora_core::synth::layer_name(3))));
    }
    assert!(boundary_steps(&sched)[0] == 0);
}

#[test]
fn manifest_files_round_trip_and_are_stable() {
    let (content, style, sched) = pair_with_switches();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.json");
    let p2 = dir.path().join("b.json");
    write_manifest(&sched, &p1).unwrap();
    let m = FusionManifest::from_schedule(&sched).with_sources(Some(&content), Some(&style));
    m.write(&p2).unwrap();
    assert_eq!(read_manifest(&p1).unwrap(), sched);
    assert_eq!(FusionManifest::read(&p2).unwrap(), m);

    let again = dir.path().join("c.json");
    write_manifest(&sched, &again).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&again).unwrap());

    let text = std::fs::read_to_string(&p1).unwrap();
    std::fs::write(&again, &text[..text.len() - 40]).unwrap();
    assert!(matches!(read_manifest(&again), Err(Error::Format(_))));
}
