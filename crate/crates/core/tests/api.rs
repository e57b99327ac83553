use std::sync::Arc;

use accel_core::api::*;
use accel_core::attributes::AttributeLexicon;
use accel_core::embedding::{Embedder, HashProvider};
use accel_core::indices::SelectionStatus;
use accel_core::narration::{attribute_key, ReflectionStatus, ScriptedChatClient};
use accel_core::pipeline::{score_texts, train, LambdaSetting, TrainConfig};
use accel_core::ranking::{fractional_ranks, RankOrder};
use accel_core::synthetic::{generate, SyntheticSpec};
use accel_core::Error;

const DIM: usize = 32;

fn embedder() -> Embedder {
    Embedder::uncached(Arc::new(HashProvider::new(DIM, 5)))
}

fn engine() -> Engine {
    let corpus = generate(&HashProvider::new(DIM, 5), &SyntheticSpec { n_experiments: 20, ..Default::default() }).unwrap();
    let cfg = TrainConfig {
        q: DIM,
        lambda: LambdaSetting::Fixed { value: 1e-6 },
        ..Default::default()
    };
    let bundle = train(&embedder(), &corpus.experiments, None, &AttributeLexicon::sample(), &cfg).unwrap();
    Engine::new(bundle, embedder(), EngineOptions::default()).unwrap()
}

fn variants(texts: &[&str]) -> Vec<Variant> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Variant { id: format!("v{i}"), text: t.to_string() })
        .collect()
}

fn arms() -> Vec<ArmInput> {
    [
        ("a", "Last chance: save 50% today only", 1000, 80),
        ("b", "Discover our new spring collection", 1000, 40),
        ("c", "Free shipping on every order", 1000, 55),
    ]
    .into_iter()
    .map(|(id, text, impressions, clicks)| ArmInput { id: id.into(), text: text.into(), impressions, clicks })
    .collect()
}

fn field_of(e: Error) -> String {
    match e {
        Error::InvalidField { field, .. } => field,
        other => panic!("expected a field error, got {other:?}"),
    }
}

#[test]
fn rank_matches_library_scores() {
    let eng = engine();
    let texts = ["Join today and save", "A calm morning read", "Only 3 seats left"];
    let resp = eng.rank(&RankRequest { variants: variants(&texts) }).unwrap();
    assert!(resp.relative);
    assert_eq!(resp.scored.len(), 3);
    let owned: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
    let scores = score_texts(eng.bundle(), &embedder(), &owned).unwrap();
    let ranks = fractional_ranks(&scores, RankOrder::Descending);
    for s in &resp.scored {
        let i: usize = s.id[1..].parse().unwrap();
        assert_eq!(s.score, scores[i]);
        assert_eq!(s.rank, ranks[i]);
    }
    assert!(resp.scored.windows(2).all(|w| w[0].rank <= w[1].rank));
}

#[test]
fn rank_rejects_single_variant_and_bad_fields() {
    let eng = engine();
    let e = eng.rank(&RankRequest { variants: variants(&["only one"]) }).unwrap_err();
    assert!(e.is_invalid_input());
    assert_eq!(field_of(e), "variants");

    let mut vs = variants(&["one", "two"]);
    vs[1].id = "v0".into();
    assert_eq!(field_of(eng.rank(&RankRequest { variants: vs }).unwrap_err()), "variants[1].id");

    let vs = variants(&["one", "   "]);
    assert_eq!(field_of(eng.rank(&RankRequest { variants: vs }).unwrap_err()), "variants[1].text");
}

#[test]
fn insights_totals_and_gap_identity() {
    let eng = engine();
    let resp = eng.insights(&InsightsRequest { arms: arms(), k: Some(2), narrate: false }).unwrap();
    assert_eq!(resp.best.id, "a");
    assert_eq!(resp.worst.id, "b");
    assert_eq!(resp.contributions.len(), eng.bundle().m());
    let sum: f64 = resp.contributions.iter().map(|c| c.contribution).sum();
    assert_eq!(sum, resp.contribution_total);
    assert!(resp.selected.len() <= 2);
    assert!(resp.selected.iter().all(|s| s.contribution > 0.0));
    let g = resp.gap;
    assert!((g.explained + g.residual - g.total).abs() < 1e-8);
    // total gap is the predicted score difference
    assert!((g.total - (resp.best.score - resp.worst.score)).abs() < 1e-8);
    assert!(resp.narration.is_none());
    assert!(resp.warnings.is_empty());
}

#[test]
fn insights_validation() {
    let eng = engine();
    let mut a = arms();
    a[2].clicks = 2000;
    assert_eq!(field_of(eng.insights(&InsightsRequest { arms: a, k: None, narrate: false }).unwrap_err()), "arms[2].clicks");
    let mut a = arms();
    a[0].impressions = 0;
    a[0].clicks = 0;
    assert_eq!(
        field_of(eng.insights(&InsightsRequest { arms: a, k: None, narrate: false }).unwrap_err()),
        "arms[0].impressions"
    );
    assert_eq!(
        field_of(eng.insights(&InsightsRequest { arms: arms(), k: Some(0), narrate: false }).unwrap_err()),
        "k"
    );
    assert_eq!(
        field_of(eng.insights(&InsightsRequest { arms: arms()[..1].to_vec(), k: None, narrate: false }).unwrap_err()),
        "arms"
    );
}

#[test]
fn narrate_without_client_warns() {
    let eng = engine();
    let resp = eng.insights(&InsightsRequest { arms: arms(), k: None, narrate: true }).unwrap();
    assert!(resp.narration.is_none());
    assert_eq!(resp.warnings.len(), 1);
    assert!(resp.warnings[0].contains("no chat client"));
    let resp = eng
        .opportunities(&OpportunitiesRequest { variants: variants(&["x", "y"]), history_means: None, k: None, narrate: true })
        .unwrap();
    assert!(resp.narration.is_none());
    assert!(resp.warnings.iter().any(|w| w.contains("no chat client")));
}

#[test]
fn insights_narration_with_scripted_client() {
    let eng = engine();
    let plain = eng.insights(&InsightsRequest { arms: arms(), k: Some(2), narrate: false }).unwrap();
    assert!(!plain.selected.is_empty(), "fixture should select at least one attribute");
    let mut reply = String::new();
    for s in &plain.selected {
        reply.push_str(&format!(
            "**{} {}**: The winner says \"save 50% today\" up front.\n\n",
            s.attribute,
            s.polarity.verb()
        ));
    }
    reply.push_str("**Not An Attribute helps**: \"Free shipping\" matters.\n");
    let client = ScriptedChatClient::new().with_sequence([reply]).with_default("ACCEPT");
    let eng = eng.with_chat_client(Arc::new(client));
    let resp = eng.insights(&InsightsRequest { arms: arms(), k: Some(2), narrate: true }).unwrap();
    let n = resp.narration.expect("narration present");
    assert_eq!(n.reflection_status, ReflectionStatus::Ok);
    assert_eq!(n.insights.len(), plain.selected.len());
    assert!(n.insights.len() <= 2);
    for c in &n.insights {
        assert!(c.accepted);
        for p in &c.cited_phrases {
            assert!(arms().iter().any(|a| a.text.contains(p.as_str())));
        }
    }
    assert!(n.rejected.iter().any(|r| r.attribute == attribute_key("Not An Attribute")));
    // quantitative part is unchanged by narration
    assert_eq!(resp.contributions, plain.contributions);
}

#[test]
fn failing_chat_client_degrades() {
    let eng = engine().with_chat_client(Arc::new(ScriptedChatClient::new()));
    let resp = eng.insights(&InsightsRequest { arms: arms(), k: None, narrate: true }).unwrap();
    let n = resp.narration.unwrap();
    assert_eq!(n.reflection_status, ReflectionStatus::Degraded);
    assert!(n.insights.is_empty());
    assert!(resp.warnings.iter().any(|w| w.contains("narration unavailable")));
}

#[test]
fn opportunities_shapes_and_history() {
    let eng = engine();
    let m = eng.bundle().m();
    let vs = variants(&["Save big now", "Meet the team behind the product"]);
    let resp = eng
        .opportunities(&OpportunitiesRequest { variants: vs.clone(), history_means: None, k: Some(3), narrate: false })
        .unwrap();
    assert_eq!(resp.attributes.len(), m);
    assert!(resp.attributes.iter().all(|a| a.novelty_rank.is_none()));
    for a in &resp.attributes {
        assert_eq!(a.opportunity_rank, a.importance_rank - a.expression_rank);
    }
    match resp.status {
        SelectionStatus::Selected => assert!(!resp.selected.is_empty() && resp.selected.len() <= 3),
        SelectionStatus::NoOpportunity => assert!(resp.selected.is_empty()),
    }
    assert!(resp.selected.iter().all(|s| s.impact > 0.0));

    let hist = vec![0.0; m];
    let resp = eng
        .opportunities(&OpportunitiesRequest { variants: vs.clone(), history_means: Some(hist), k: None, narrate: false })
        .unwrap();
    assert!(resp.attributes.iter().all(|a| a.novelty_rank.is_some()));

    let e = eng
        .opportunities(&OpportunitiesRequest { variants: vs.clone(), history_means: Some(vec![0.0; m - 1]), k: None, narrate: false })
        .unwrap_err();
    assert_eq!(field_of(e), "history_means");
    let e = eng
        .opportunities(&OpportunitiesRequest { variants: vec![], history_means: None, k: None, narrate: false })
        .unwrap_err();
    assert_eq!(field_of(e), "variants");
}

#[test]
fn opportunity_narration_keeps_selected_only() {
    let eng = engine();
    let vs = variants(&["Save big now", "Meet the team"]);
    let plain = eng
        .opportunities(&OpportunitiesRequest { variants: vs.clone(), history_means: None, k: Some(2), narrate: false })
        .unwrap();
    let mut reply = String::new();
    for s in &plain.selected {
        reply.push_str(&format!("{}: Lean into it. Example: \"Try {} now\"\n", s.attribute, s.attribute));
    }
    let unselected = plain
        .attributes
        .iter()
        .find(|a| !plain.selected.iter().any(|s| s.attribute == a.attribute))
        .unwrap();
    reply.push_str(&format!("{}: Off target. Example: \"nope\"\n", unselected.attribute));
    let eng = eng.with_chat_client(Arc::new(ScriptedChatClient::new().with_default(reply)));
    let resp = eng
        .opportunities(&OpportunitiesRequest { variants: vs, history_means: None, k: Some(2), narrate: true })
        .unwrap();
    let n = resp.narration.unwrap();
    assert_eq!(n.suggestions.len(), plain.selected.len());
    for (s, sel) in n.suggestions.iter().zip(&plain.selected) {
        assert_eq!(s.attribute, sel.attribute);
        assert_eq!(s.learning_potential, sel.learning_potential);
        assert_eq!(s.conversion_potential, sel.conversion_potential);
    }
}

#[test]
fn health_and_model_info() {
    let eng = engine();
    let h = eng.health();
    assert_eq!(h.status, "ok");
    assert_eq!(h.bundle_version, 1);
    let info = eng.model_info();
    assert_eq!((info.p, info.m), (DIM, 16));
    assert_eq!(info.attributes.len(), 16);
    assert_eq!(info.lambda, 1e-6);
}

#[test]
fn engine_refuses_other_provider() {
    let corpus = generate(&HashProvider::new(DIM, 5), &SyntheticSpec { n_experiments: 8, ..Default::default() }).unwrap();
    let bundle = train(&embedder(), &corpus.experiments, None, &AttributeLexicon::sample(), &TrainConfig::default()).unwrap();
    let other = Embedder::uncached(Arc::new(HashProvider::new(DIM, 6)));
    assert!(matches!(Engine::new(bundle, other, EngineOptions::default()), Err(Error::Config(_))));
}

#[test]
fn engine_config_infers_hash_provider() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bundle");
    let corpus = generate(&HashProvider::new(DIM, 5), &SyntheticSpec { n_experiments: 8, ..Default::default() }).unwrap();
    let bundle = train(&embedder(), &corpus.experiments, None, &AttributeLexicon::sample(), &TrainConfig::default()).unwrap();
    accel_core::bundle::save_bundle(&bundle, &path).unwrap();
    let eng = EngineConfig { bundle: path.clone(), ..Default::default() }.build().unwrap();
    assert_eq!(eng.model_info().provider_id, format!("hash-d{DIM}-s5"));
    let wrong = EngineConfig {
        bundle: path,
        provider: Some("hash:16:5".parse().unwrap()),
        ..Default::default()
    };
    assert!(matches!(wrong.build(), Err(Error::Config(_))));
    assert!(matches!(provider_from_id("minilm-v2"), Err(Error::Config(_))));
    assert_eq!("script:/x.jsonl".parse::<ChatSpec>().unwrap(), ChatSpec::Script("/x.jsonl".into()));
}
