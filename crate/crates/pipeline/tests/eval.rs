mod common;

use featsplat::losses::{psnr, ssim};
use featsplat_pipeline::eval::{aggregate, evaluate, metric_row, MetricRow, MetricsReport};
use featsplat_pipeline::model::Model;
use featsplat_pipeline::synth::{Dataset, Split};
use featsplat_pipeline::{run, Preset};
use serde_json::Value;

fn schema() -> jsonschema::JSONSchema {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/metrics.schema.json");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::JSONSchema::compile(&v).unwrap()
}

#[test]
fn ground_truth_against_itself_hits_the_caps() {
    let cfg = common::tiny_cfg();
    let dir = tempfile::tempdir().unwrap();
    let scenes = common::make_data(dir.path(), &cfg);
    let m = Model::new(&cfg).unwrap();
    let gt = &scenes[0].views[0].image;
    let row = metric_row("s", 0, "raw", gt, gt, &m.proxy).unwrap();
    assert_eq!(row.psnr, 100.0);
    assert!((row.ssim - 1.0).abs() < 1e-12);
    assert_eq!(row.perceptual, 0.0);
}

#[test]
fn aggregate_is_the_mean_of_the_rows() {
    let row = |kind: &str, p: f64, s: f64, q: f64| MetricRow {
        scene: "a".into(),
        view: 0,
        kind: kind.into(),
        psnr: p,
        ssim: s,
        perceptual: q,
    };
    let rows = vec![
        row("raw", 20.0, 0.5, 0.1),
        row("refined", 25.0, 0.7, 0.05),
        row("raw", 22.0, 0.6, 0.3),
        row("raw", 30.0, 0.9, 0.2),
    ];
    let agg = aggregate(&rows);
    assert_eq!(agg.len(), 2);
    assert_eq!((agg[0].kind.as_str(), agg[0].count), ("raw", 3));
    assert!((agg[0].psnr - 24.0).abs() < 1e-12);
    assert!((agg[0].ssim - 2.0 / 3.0).abs() < 1e-12);
    assert!((agg[0].perceptual - 0.2).abs() < 1e-12);
    assert_eq!((agg[1].count, agg[1].psnr), (1, 25.0));
}

#[test]
fn report_rows_recompute_and_validate_against_the_schema() {
    let cfg = Preset::Sd.apply(&common::tiny_cfg());
    let dir = tempfile::tempdir().unwrap();
    common::make_data(dir.path(), &cfg);
    let m = Model::new(&cfg).unwrap();
    let report = run::eval(&m, dir.path(), Split::Test).unwrap();
    assert_eq!(report.split, "test");
    assert_eq!(report.rows.len(), 2 * 3);

    // independent pass over the raw rows
    let scenes = Dataset::open(dir.path()).unwrap().load(Split::Test, &cfg).unwrap();
    let s = &scenes[0];
    for t in 0..3 {
        let inputs: Vec<_> = (0..3).filter(|&i| i != t).map(|i| &s.views[i]).collect();
        let img = diffcore::no_grad(|| {
            let rec = m.reconstruct(&inputs).unwrap();
            m.render(&rec, &s.views[t].cam).unwrap().color
        });
        let r = report.rows.iter().find(|r| r.view == t && r.kind == "raw").unwrap();
        assert_eq!(r.psnr, psnr(&img, &s.views[t].image).unwrap());
        assert_eq!(r.ssim, ssim(&img, &s.views[t].image).unwrap());
    }
    for a in &report.aggregate {
        let sel: Vec<_> = report.rows.iter().filter(|r| r.kind == a.kind).collect();
        let mean = sel.iter().map(|r| r.perceptual).sum::<f64>() / sel.len() as f64;
        assert!((a.perceptual - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }

    let v = serde_json::to_value(&report).unwrap();
    let compiled = schema();
    assert!(compiled.is_valid(&v));
    let back: MetricsReport = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(back, report);

    let mut broken = v.clone();
    broken["rows"][0]["kind"] = Value::from("blurry");
    assert!(!compiled.is_valid(&broken));
    let mut broken = v;
    broken["aggregate"][0].as_object_mut().unwrap().remove("count");
    assert!(!compiled.is_valid(&broken));
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = common::tiny_cfg();
    let dir = tempfile::tempdir().unwrap();
    let scenes = common::make_data(dir.path(), &cfg);
    let m = Model::new(&cfg).unwrap();
    let a = evaluate(&m, &scenes, "train").unwrap();
    let b = evaluate(&m, &scenes, "train").unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
