use graver_demo::{block_graphon, check_random_encoder_json, mix_vocabulary_json, sample_graphon_json, toy_bank};

#[test]
fn sampled_graph_respects_block_extremes() {
    let v = sample_graphon_json(1.0, 0.0, 8, 3).unwrap();
    let cells: Vec<usize> = serde_json::from_value(v["cells"].clone()).unwrap();
    let edges: Vec<(usize, usize)> = serde_json::from_value(v["edges"].clone()).unwrap();
    for i in 0..8 {
        for j in i + 1..8 {
            // nodes sharing a cell never link: the graphon diagonal is zero
            let same = cells[i] != cells[j] && (2 * cells[i] < 8) == (2 * cells[j] < 8);
            assert_eq!(edges.contains(&(i, j)), same, "{i}-{j}");
        }
    }
    assert_eq!(block_graphon(4, 0.3, 0.1).unwrap().matrix().get(0, 3), 0.1);
    assert!(sample_graphon_json(0.5, 0.5, 0, 1).is_err());
}

#[test]
fn mixing_reports_simplices_and_entropy() {
    let v = mix_vocabulary_json(&[0.0, 0.0], &[0.0; 4], 1).unwrap();
    let loss = v["loss"].as_f64().unwrap();
    assert!((loss - (2f64.ln() + 2.0 * 2f64.ln())).abs() < 1e-12);

    // domains are listed alphabetically: chains, shapes
    assert_eq!(v["domains"], serde_json::json!(["chains", "shapes"]));
    let sharp = mix_vocabulary_json(&[-40.0, 40.0], &[0.0, 0.0, 40.0, -40.0], 1).unwrap();
    assert!(sharp["loss"].as_f64().unwrap() < 2.0 * 2f64.ln());
    // routed entirely to the triangle-with-tail class
    let bank = toy_bank().unwrap();
    let want = bank.entry("shapes", 0).unwrap().structure.matrix();
    let got: Vec<Vec<f64>> = serde_json::from_value(sharp["graphon"].clone()).unwrap();
    for (i, row) in got.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            assert!((w - want.get(i, j)).abs() < 1e-9);
        }
    }
    assert!(mix_vocabulary_json(&[0.0], &[0.0; 4], 1).is_err());
}

#[test]
fn random_encoder_stays_within_the_bound() {
    let v = check_random_encoder_json(25, 4, 2, 7).unwrap();
    assert_eq!(v["total"], 25);
    assert_eq!(v["pass"], 25);
    assert!(check_random_encoder_json(0, 4, 2, 7).is_err());
}
