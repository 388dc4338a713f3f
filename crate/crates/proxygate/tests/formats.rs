use std::path::Path;

use proxygate::genspec::{parse_corpus, GeneratorSpec, SpecKind};
use proxygate_core::experiments::ForbiddenTask;
use proxygate_core::TokenId;

#[test]
fn table_spec_round_trips() {
    let task = ForbiddenTask::new(1).unwrap();
    let spec = GeneratorSpec::from_table(&task.generator).unwrap();
    assert_eq!(spec.kind, SpecKind::Table);
    let text = serde_json::to_string(&spec).unwrap();
    let back: GeneratorSpec = serde_json::from_str(&text).unwrap();
    let g = back.build().unwrap();
    for prefix in [vec![], vec![TokenId(4)], vec![TokenId(7), TokenId(2)]] {
        assert_eq!(
            g.logits(&prefix).unwrap(),
            task.generator.logits(&prefix).unwrap()
        );
        assert_eq!(
            g.hidden(&prefix).unwrap(),
            task.generator.hidden(&prefix).unwrap()
        );
    }
    assert!(text.contains("\"match\":\"suffix\""));
}

#[test]
fn spec_errors_are_field_level() {
    let spec: GeneratorSpec =
        serde_json::from_str(r#"{"kind": "table", "vocab_size": 3, "eos_id": 2, "hidden_dim": 4}"#)
            .unwrap();
    assert!(spec.build().unwrap_err().to_string().contains("table"));
    let spec: GeneratorSpec = serde_json::from_str(
        r#"{"kind": "table", "vocab_size": 3, "eos_id": 7, "hidden_dim": 4, "table": []}"#,
    )
    .unwrap();
    assert!(spec.build().is_err());
}

#[test]
fn corpus_parsing() {
    let p = Path::new("c.txt");
    let c = parse_corpus("1 2  3\n\n  4\t5\n", p).unwrap();
    assert_eq!(
        c,
        vec![
            vec![TokenId(1), TokenId(2), TokenId(3)],
            vec![TokenId(4), TokenId(5)]
        ]
    );
    let err = parse_corpus("1 2\n3 -4\n", p).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
