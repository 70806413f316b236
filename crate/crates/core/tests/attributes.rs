mod common;

use rand::Rng as _;
use tsgzsl::attributes::{compute_attributes, to_csv, ApEnParams, AttributeVector, ATTRIBUTE_NAMES};
use tsgzsl::numcore::rng_for;

#[test]
fn moments_match_textbook_formulas() {
    let mut rng = rng_for(31, 0);
    for _ in 0..50 {
        let x: Vec<f64> = (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let m = |p: i32| x.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / n;
        let skew = m(3) / m(2).powf(1.5);
        let kurt = m(4) / (m(2) * m(2)) - 3.0;
        let a = compute_attributes(&x, ApEnParams::default()).unwrap();
        assert!((a.get("skew").unwrap() - skew).abs() < 1e-9);
        assert!((a.get("kurtosis").unwrap() - kurt).abs() < 1e-9);
        assert!((a.get("mean").unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn attribute_order_survives_serialization() {
    let a = compute_attributes(&[0.5, -1.0, 2.0, 2.0, 0.0, 1.5], ApEnParams::default()).unwrap();
    let json = serde_json::to_string(&a).unwrap();
    let back: AttributeVector = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
    for (i, name) in ATTRIBUTE_NAMES.iter().enumerate() {
        assert_eq!(back.get(name), Some(a.0[i]));
    }
    let csv = to_csv(&[0], &[a]);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header[0], "series_index");
    assert_eq!(&header[1..], &ATTRIBUTE_NAMES[..]);
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, a.0.to_vec());
}
