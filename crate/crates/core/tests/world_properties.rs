use std::collections::BTreeSet;

use dmn_core::dataset::{generate_dataset, read_jsonl, write_jsonl, Dataset, DatasetConfig, Split};
use dmn_core::executor::symbolic_execute;
use dmn_core::layout::{parse_tokens, Binding, ModuleKind, ModuleToken};
use dmn_core::questions::{generate_question, Category, NUM_TEMPLATES};
use dmn_core::scene::{generate_scene, Color, SceneConfig, SceneGraph, SceneObject, Shape, Size};
use dmn_core::{Answer, Error};
use proptest::prelude::*;

fn count(text: &str, scene: &SceneGraph) -> usize {
    match symbolic_execute(&parse_tokens(text).unwrap(), scene).unwrap() {
        Answer::Number(n) => n as usize,
        other => panic!("expected a number, got {other}"),
    }
}

fn binding_text(b: &Binding) -> String {
    b.to_string()
}

fn attribute_binding() -> impl Strategy<Value = Binding> {
    prop_oneof![
        prop::sample::select(Color::ALL.to_vec()).prop_map(Binding::Color),
        prop::sample::select(Shape::ALL.to_vec()).prop_map(Binding::Shape),
        prop::sample::select(Size::ALL.to_vec()).prop_map(Binding::Size),
    ]
}

fn matches(o: &SceneObject, b: &Binding) -> bool {
    match b {
        Binding::Color(c) => o.color == *c,
        Binding::Shape(s) => o.shape == *s,
        Binding::Size(z) => o.size == *z,
        _ => false,
    }
}

#[test]
fn count_of_find_equals_enumerated_matches() {
    for seed in 0..200 {
        let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
        for c in Color::ALL.iter().copied() {
            let expected = scene.objects.iter().filter(|o| o.color == c).count();
            assert_eq!(count(&format!("find[color={c}] count"), &scene), expected);
        }
    }
}

#[test]
fn equal_to_on_two_red_two_blue() {
    let obj = |row, col, color| SceneObject {
        row,
        col,
        shape: Shape::Circle,
        color,
        size: Size::Small,
    };
    let scene = SceneGraph {
        grid_size: 5,
        objects: vec![
            obj(0, 0, Color::Red),
            obj(1, 1, Color::Blue),
            obj(2, 2, Color::Red),
            obj(3, 3, Color::Blue),
        ],
    };
    let tokens = parse_tokens("find[color=red] find[color=blue] equal_to").unwrap();
    assert_eq!(symbolic_execute(&tokens, &scene).unwrap(), Answer::Yes);
    let tokens = parse_tokens("find[color=red] find[color=blue] greater_than").unwrap();
    assert_eq!(symbolic_execute(&tokens, &scene).unwrap(), Answer::No);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adding_a_matching_object_never_shrinks_find(seed in 0u64..10_000, b in attribute_binding()) {
        let mut scene = generate_scene(&SceneConfig::default(), seed).unwrap();
        let before = count(&format!("find[{}] count", binding_text(&b)), &scene);
        let occupied: BTreeSet<usize> = scene.objects.iter().map(|o| scene.cell_index(o)).collect();
        let free = (0..25).find(|c| !occupied.contains(c)).unwrap();
        let mut o = SceneObject { row: free / 5, col: free % 5, shape: Shape::Square, color: Color::Gray, size: Size::Large };
        match b {
            Binding::Color(c) => o.color = c,
            Binding::Shape(s) => o.shape = s,
            Binding::Size(z) => o.size = z,
            _ => unreachable!(),
        }
        prop_assert!(matches(&o, &b));
        scene.objects.push(o);
        let after = count(&format!("find[{}] count", binding_text(&b)), &scene);
        prop_assert_eq!(after, before + 1);
    }

    #[test]
    fn union_contains_intersection(seed in 0u64..10_000, a in attribute_binding(), b in attribute_binding()) {
        let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
        let (a, b) = (binding_text(&a), binding_text(&b));
        let ca = count(&format!("find[{a}] count"), &scene);
        let cb = count(&format!("find[{b}] count"), &scene);
        let and = count(&format!("find[{a}] find[{b}] and count"), &scene);
        let or = count(&format!("find[{a}] find[{b}] or count"), &scene);
        prop_assert!(or >= ca.max(cb));
        prop_assert!(and <= ca.min(cb));
        prop_assert_eq!(or + and, ca + cb);
    }

    #[test]
    fn relocate_selects_cells_in_relation_to_the_anchor(seed in 0u64..10_000) {
        let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
        let anchor = scene.objects[0];
        let unique = scene.objects.iter().filter(|o| o.color == anchor.color && o.shape == anchor.shape).count() == 1;
        prop_assume!(unique);
        for rel in dmn_core::scene::Relation::ALL.iter().copied() {
            let expected = scene.objects.iter().filter(|o| rel.holds(o.cell(), anchor.cell())).count();
            let text = format!("find[color={}] filter[shape={}] relocate[rel={rel}] count", anchor.color, anchor.shape);
            prop_assert_eq!(count(&text, &scene), expected);
        }
    }

    #[test]
    fn scenes_are_valid_and_deterministic(seed in any::<u64>()) {
        let config = SceneConfig::default();
        let a = generate_scene(&config, seed).unwrap();
        let b = generate_scene(&config, seed).unwrap();
        prop_assert_eq!(&a, &b);
        a.validate().unwrap();
        prop_assert!((config.min_objects..=config.max_objects).contains(&a.objects.len()));
    }
}

#[test]
fn generated_answers_agree_with_the_executor() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 1000 {
        let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
        let template = (seed as usize) % NUM_TEMPLATES;
        seed += 1;
        let q = match generate_question(&scene, template, seed) {
            Ok(q) => q,
            Err(Error::TemplateInapplicable(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        assert_eq!(symbolic_execute(&q.layout, &scene).unwrap(), q.answer);
        let root = q.layout.last().unwrap().kind;
        assert_eq!(Category::of_root(root), Some(q.category));
        assert_eq!(q.template, template);
        checked += 1;
    }
}

fn small_config() -> DatasetConfig {
    DatasetConfig {
        train: 120,
        val: 40,
        test: 40,
        ..DatasetConfig::default()
    }
}

#[test]
fn dataset_splits_have_requested_sizes_and_disjoint_scenes() {
    let ds = generate_dataset(&small_config(), 5).unwrap();
    let ids = |s: Split| -> BTreeSet<u64> { ds.split(s).iter().map(|e| e.record.scene_id).collect() };
    assert_eq!(ds.train.len(), 120);
    assert_eq!(ds.val.len(), 40);
    assert_eq!(ds.test.len(), 40);
    assert!(ids(Split::Train).is_disjoint(&ids(Split::Val)));
    assert!(ids(Split::Train).is_disjoint(&ids(Split::Test)));
    assert!(ids(Split::Val).is_disjoint(&ids(Split::Test)));
    for split in Split::ALL {
        for ex in ds.split(split) {
            assert_eq!(ex.record.split, split);
        }
    }
    assert_eq!(generate_dataset(&small_config(), 5).unwrap(), ds);
    assert_ne!(generate_dataset(&small_config(), 6).unwrap(), ds);
}

#[test]
fn jsonl_round_trip() {
    let ds = generate_dataset(&small_config(), 9).unwrap();
    let mut buf = Vec::new();
    for split in Split::ALL {
        write_jsonl(&mut buf, ds.split(split)).unwrap();
    }
    let back = Dataset::from_records(read_jsonl(buf.as_slice()).unwrap()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn malformed_jsonl_reports_the_line() {
    let ds = generate_dataset(&small_config(), 1).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &ds.train[..2]).unwrap();
    buf.extend_from_slice(b"{not json}\n");
    let err = read_jsonl(buf.as_slice()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn bound_tokens_reject_wrong_argument_kinds() {
    let scene = generate_scene(&SceneConfig::default(), 0).unwrap();
    let bad = vec![
        ModuleToken::bound(ModuleKind::Find, Binding::Relation(dmn_core::scene::Relation::Above)),
        ModuleToken::bare(ModuleKind::Count),
    ];
    assert!(matches!(symbolic_execute(&bad, &scene), Err(Error::Binding { index: 1, .. })));
}
