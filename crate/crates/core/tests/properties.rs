use std::collections::BTreeSet;

use proptest::prelude::*;

use kgprompt_core::bandit::{ArmId, BanditModel, BanditReward};
use kgprompt_core::embeddings::{cosine, mock_embed, path_embedding, EmbeddingTable, GraphVectors};
use kgprompt_core::kg::{Choice, Direction, EntityId, GraphBuilder, KnowledgeGraph, RelationId};
use kgprompt_core::llm::parse_answer;
use kgprompt_core::prompt::{
    assemble_prompt, parse_triples, render, render_triples, Extractor, KnowledgeBundle, TemplateId, Verbalizer,
};
use kgprompt_core::rl::ReasoningChain;

fn graph_from(edges: &[(u8, u8, u8)]) -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    for &(h, r, t) in edges {
        b.add(&format!("n{h}"), &format!("rel{r}"), &format!("n{t}"));
    }
    b.build()
}

/// Gaussian elimination with partial pivoting; independent of the
/// factorization used by the bandit.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacency_mirrors_triples(edges in prop::collection::vec((0u8..20, 0u8..4, 0u8..20), 1..80)) {
        let g = graph_from(&edges);
        let unique: BTreeSet<(String, String, String)> = edges
            .iter()
            .map(|&(h, r, t)| (format!("n{h}"), format!("rel{r}"), format!("n{t}")))
            .collect();
        prop_assert_eq!(g.triples().len(), unique.len());
        let mut fwd = 0;
        let mut bwd = 0;
        for i in 0..g.entity_count() {
            let e = EntityId(i as u32);
            for &(r, t) in g.forward(e) {
                fwd += 1;
                let key = (g.entity_name(e).to_string(), g.relation_name(r).to_string(), g.entity_name(t).to_string());
                prop_assert!(unique.contains(&key));
                prop_assert!(g.backward(t).contains(&(r, e)));
            }
            bwd += g.backward(e).len();
            let both = g.neighbors(e, Direction::Both).unwrap();
            prop_assert_eq!(both.len(), g.forward(e).len() + g.backward(e).len());
        }
        prop_assert_eq!(fwd, unique.len());
        prop_assert_eq!(bwd, unique.len());
    }

    #[test]
    fn cosine_is_symmetric_bounded_and_scale_free(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        k in 0.1f64..50.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let ab = cosine(&a, &b).unwrap().value;
        let ba = cosine(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
        prop_assert!((cosine(&scaled, &b).unwrap().value - ab).abs() < 1e-9);
        prop_assert!((cosine(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path_embedding_is_mean_of_walk(len in 0usize..6, dim in 1usize..6, seed in 0u64..1000) {
        let mut b = GraphBuilder::new();
        for i in 0..len.max(1) {
            b.add(&format!("v{i}"), &format!("r{}", i % 2), &format!("v{}", i + 1));
        }
        let g = b.build();
        let names: Vec<&String> = g.entity_names().iter().chain(g.relation_names()).collect();
        let table = EmbeddingTable::mock(&names, dim, seed);
        let vectors = GraphVectors::new(&g, &table);
        let hops: Vec<(RelationId, EntityId)> = (0..len)
            .map(|i| (g.relation_id(&format!("r{}", i % 2)).unwrap(), g.entity_id(&format!("v{}", i + 1)).unwrap()))
            .collect();
        let chain = ReasoningChain::from_hops(&g, g.entity_id("v0").unwrap(), &hops);
        let got = path_embedding(&chain, &vectors).unwrap();

        let mut walk = vec!["v0".to_string()];
        for i in 0..len {
            walk.push(format!("r{}", i % 2));
            walk.push(format!("v{}", i + 1));
        }
        for k in 0..dim {
            let brute: f64 = walk.iter().map(|n| table.get(n).unwrap()[k] as f64).sum::<f64>() / walk.len() as f64;
            prop_assert!((got[k] - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn incremental_bandit_matches_batch_ridge(
        obs in prop::collection::vec((0usize..6, prop::collection::vec(-1.0f64..1.0, 4), 0u8..2), 1..60),
        lambda in 0.2f64..3.0,
    ) {
        let d = 4;
        let mut model = BanditModel::new(d, lambda, 0.1).unwrap();
        for (arm, c, r) in &obs {
            model.update(ArmId(*arm), c, BanditReward::new(*r).unwrap()).unwrap();
        }
        for arm in ArmId::all() {
            let mut a = vec![vec![0.0; d]; d];
            for (i, row) in a.iter_mut().enumerate() {
                row[i] = lambda;
            }
            let mut b = vec![0.0; d];
            for (x, c, r) in &obs {
                if *x != arm.0 {
                    continue;
                }
                for i in 0..d {
                    for j in 0..d {
                        a[i][j] += c[i] * c[j];
                    }
                    b[i] += *r as f64 * c[i];
                }
            }
            let expected = solve(a, b);
            let got = model.arm(arm).alpha().unwrap();
            for (g, e) in got.iter().zip(&expected) {
                prop_assert!((g - e).abs() < 1e-8, "{} vs {}", g, e);
            }
        }
    }

    #[test]
    fn confidence_width_never_grows(
        stream in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..40),
        probe in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let mut model = BanditModel::new(3, 1.0, 0.1).unwrap();
        let mut last = model.arm(ArmId(0)).confidence_width(&probe);
        for c in &stream {
            model.update(ArmId(0), c, BanditReward::new(1).unwrap()).unwrap();
            let w = model.arm(ArmId(0)).confidence_width(&probe);
            prop_assert!(w <= last * (1.0 + 1e-12) + 1e-15);
            last = w;
        }
    }

    #[test]
    fn triples_render_round_trips(edges in prop::collection::vec((0u8..12, 0u8..3, 0u8..12), 1..25)) {
        let g = graph_from(&edges);
        let bundle = KnowledgeBundle::new(g.triples().iter().copied(), Extractor::Subgraph);
        let text = render_triples(&bundle, &g);
        let parsed = parse_triples(&text);
        let expected: Vec<(String, String, String)> = bundle
            .triples()
            .iter()
            .map(|t| (g.entity_name(t.head).to_string(), g.relation_name(t.rel).to_string(), g.entity_name(t.tail).to_string()))
            .collect();
        prop_assert_eq!(parsed, expected);
    }

    #[test]
    fn renders_are_deterministic(edges in prop::collection::vec((0u8..12, 0u8..3, 0u8..12), 0..25)) {
        let g = graph_from(&edges);
        let v = Verbalizer::default();
        for template in TemplateId::ALL {
            let once = render(&KnowledgeBundle::new(g.triples().iter().copied(), Extractor::Rl), &g, &v, template);
            let twice = render(&KnowledgeBundle::new(g.triples().iter().copied(), Extractor::Rl), &g, &v, template);
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn parsed_label_is_always_a_choice(reply in "[ -~]{0,60}", n in 1usize..6) {
        let choices: Vec<Choice> = ["A", "B", "C", "D", "E"][..n]
            .iter()
            .enumerate()
            .map(|(i, l)| Choice { label: l.to_string(), text: format!("option {i}") })
            .collect();
        let p = parse_answer(&reply, &choices);
        match &p.label {
            Some(l) => {
                prop_assert!(p.parse_ok);
                prop_assert!(choices.iter().any(|c| &c.label == l));
            }
            None => prop_assert!(!p.parse_ok),
        }
    }
}

#[test]
fn one_step_path_mean() {
    let mut b = GraphBuilder::new();
    b.add("s", "r", "x");
    let g = b.build();
    let table = EmbeddingTable::new(2, vec!["s".into(), "x".into(), "r".into()], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = GraphVectors::new(&g, &table);
    let chain = ReasoningChain::from_hops(&g, g.entity_id("s").unwrap(), &[(g.relation_id("r").unwrap(), g.entity_id("x").unwrap())]);
    let p = path_embedding(&chain, &v).unwrap();
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn mock_vectors_do_not_collide() {
    for i in 0..1000 {
        let a = mock_embed(&format!("text {i}"), 16, 0);
        let b = mock_embed(&format!("other text {i}"), 16, 0);
        assert!(cosine(&a, &b).unwrap().value < 1.0 - 1e-6, "pair {i}");
    }
}

#[test]
fn frame_has_no_background_without_knowledge() {
    let q = kgprompt_core::kg::QuestionContext {
        id: "q".into(),
        question_text: "Where?".into(),
        choices: vec![Choice { label: "A".into(), text: "here".into() }],
        gold_label: Some("A".into()),
        source_entities: vec![],
        target_entities: Default::default(),
    };
    let p = assemble_prompt(&q, "", TemplateId::Sentences);
    assert_eq!(p.knowledge_tokens, 0);
    assert!(p.text.starts_with("Question: Where?"));
}
