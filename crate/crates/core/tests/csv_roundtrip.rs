use std::collections::BTreeMap;
use std::fs::File;

use ara_budget::dataset::ingest_csv;
use ara_budget::synthgen::{generate_draw, ingest_spec, write_csv};
use ara_budget::{Dataset64, Preset, SynthConfig};

/// Conversion multiset keyed by (impression, arrival), with the slice given
/// as impression-side features so slice numbering does not matter.
fn canonical(
    data: &Dataset64,
    feature_of: impl Fn(usize) -> String,
) -> BTreeMap<(u64, u64), (String, String)> {
    data.records()
        .iter()
        .map(|r| ((r.impression.0, r.arrival_index), (feature_of(r.slice), format!("{:.2}", r.values[0]))))
        .collect()
}

fn round_trip(cfg: SynthConfig<f64>) {
    let draw = generate_draw(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_csv(&draw, &cfg, File::create(&path).unwrap()).unwrap();
    let ingested = ingest_csv::<f64>(&ingest_spec(&cfg, &path, 0.5)).unwrap();
    assert_eq!(ingested.rejected, 0);
    assert_eq!(ingested.accepted, draw.dataset.len());
    assert_eq!(ingested.train.num_slices(), ingested.dictionary.len());

    let names: BTreeMap<usize, String> = ingested
        .dictionary
        .iter()
        .map(|(k, v)| (v, k.to_string()))
        .collect();
    let mut back = BTreeMap::new();
    let mut interned: BTreeMap<u64, u64> = BTreeMap::new();
    // ingestion interns impression ids in order of first appearance; map
    // them back through the original ids in file order
    for (rows, part) in [(&ingested.train_rows, &ingested.train), (&ingested.test_rows, &ingested.test)] {
        for (&row, r) in rows.iter().zip(part.records()) {
            let original = draw.dataset.records()[row].impression.0;
            interned.insert(r.impression.0, original);
            back.insert(
                (original, r.arrival_index),
                (names[&r.slice].clone(), format!("{:.2}", r.values[0])),
            );
        }
    }
    let key = |j: usize| {
        let mut parts: Vec<String> = if cfg.slice_by_conversion_type {
            let (imp, t) = (j / cfg.conversion_types, j % cfg.conversion_types);
            let mut f: Vec<String> = cfg.features(imp).iter().map(|x| x.to_string()).collect();
            f.push(t.to_string());
            f
        } else {
            cfg.features(j).iter().map(|x| x.to_string()).collect()
        };
        parts.shrink_to_fit();
        parts.join("|")
    };
    assert_eq!(back, canonical(&draw.dataset, key));
    assert_eq!(
        ingested.train.len() + ingested.test.len(),
        draw.dataset.len()
    );
}

#[test]
fn round_trip_criteo() {
    round_trip(SynthConfig::preset(Preset::Criteo, 1));
}

#[test]
fn round_trip_travel_small() {
    round_trip(SynthConfig {
        k_max: 50,
        cardinalities: vec![3, 2],
        ..SynthConfig::preset(Preset::Travel, 2)
    });
}

#[test]
fn round_trip_crossed_slices() {
    round_trip(SynthConfig {
        k_max: 20,
        cardinalities: vec![2, 2, 2],
        slice_by_conversion_type: true,
        ..SynthConfig::preset(Preset::RealEstate, 3)
    });
}
