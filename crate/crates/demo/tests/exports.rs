use serde_json::Value;
use star_demo::{low_rank_json, score_synthetic_json, soft_topk_json};

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

#[test]
fn topk_weights_form_a_distribution() {
    let v = parse(soft_topk_json(&[2.0, -1.0, 0.5, 3.0, 0.0], 2, 1e-3));
    let w: Vec<f64> = v["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(v["theta"], 2.0);
    assert!(w[1] < 1e-100 && w[3] > w[0]);
    assert_eq!(
        v["selected"],
        serde_json::json!([true, false, false, true, false])
    );
    assert!(soft_topk_json(&[1.0], 2, 0.1).is_err());
}

#[test]
fn truncation_error_matches_discarded_spectrum() {
    for r in [0, 2, 5, 8] {
        let v = parse(low_rank_json(8, 6, r, 4));
        let (e, b) = (
            v["relative_error"].as_f64().unwrap(),
            v["tail_bound"].as_f64().unwrap(),
        );
        assert!((e - b).abs() < 1e-10, "rank {r}: {e} vs {b}");
    }
    assert!(low_rank_json(0, 3, 1, 0).is_err());
}

#[test]
fn synthetic_scoring_runs() {
    let v = parse(score_synthetic_json(1, 20, true));
    let n = v["series"].as_array().unwrap().len();
    assert_eq!(n, 600);
    assert_eq!(v["score_total"].as_array().unwrap().len(), n);
    let auc = v["auc_total"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}
