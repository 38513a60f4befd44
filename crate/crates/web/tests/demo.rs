use mtcaption_web::{schedule_view, Demo};

#[test]
fn first_reference_scores_perfectly() {
    let demo = Demo::build(7, 40).unwrap();
    let im = demo.image_view(3).unwrap();
    assert_eq!(im.references.len(), 5);
    let s = demo.scores(3, &im.references[0]).unwrap();
    assert_eq!(s["BLEU-4"], 1.0);
    assert_eq!(s["ROUGE-L"], 1.0);
    assert!(s["CIDEr-D"] > 0.0);
    assert!(demo.image_view(40).is_err());
}

#[test]
fn reversed_beam_pairs_back_to_itself() {
    let demo = Demo::build(7, 40).unwrap();
    let refs = demo.image_view(0).unwrap().references;
    let t = refs[..3].join("\n");
    let o: Vec<String> = refs[..3].iter().rev().cloned().collect();
    let p = demo.pairing(&t, &o.join("\n")).unwrap();
    assert_eq!(p.perm, vec![2, 1, 0]);
    assert!(p.total.abs() < 1e-12);
    assert!(demo.pairing("", "a red ball").is_err());
}

#[test]
fn schedules_have_expected_shape() {
    let s = schedule_view(64, 10, 1.0, 100, 0.9);
    let peak = s.lr.iter().cloned().fold(0.0, f64::max);
    assert_eq!(peak, s.lr[9]);
    let total: f64 = s.ema_weight.iter().sum();
    assert!((total - (1.0 - 0.9f64.powi(100))).abs() < 1e-12);
}
